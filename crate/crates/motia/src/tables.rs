//! CSV outputs.

use std::fmt::Write;

use motia_core::schedule::{NoiseSchedule, TimestepPlan};

/// `t, beta, alpha, alpha_bar, posterior_beta` for `t = 1..=T`, plus a
/// `plan_step` column (index in the inference plan, empty when unvisited)
/// when a plan is given.
pub fn schedule_csv(sched: &NoiseSchedule, plan: Option<&TimestepPlan>) -> String {
    let mut out = String::from("t,beta,alpha,alpha_bar,posterior_beta");
    if plan.is_some() {
        out.push_str(",plan_step");
    }
    out.push('\n');
    for t in 1..=sched.steps() {
        write!(
            out,
            "{t},{:e},{:e},{:e},{:e}",
            sched.beta(t),
            sched.alpha(t),
            sched.alpha_bar(t),
            sched.posterior_beta(t)
        )
        .unwrap();
        if let Some(p) = plan {
            out.push(',');
            if let Some(k) = p.timesteps().iter().position(|&s| s == t) {
                write!(out, "{k}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// `iteration, loss` rows.
pub fn loss_csv(losses: &[f32]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l:e}").unwrap();
    }
    out
}

/// `metric, region, value` rows.
pub fn metrics_csv(rows: &[(&str, &str, f64)]) -> String {
    let mut out = String::from("metric,region,value\n");
    for (m, r, v) in rows {
        writeln!(out, "{m},{r},{v}").unwrap();
    }
    out
}
