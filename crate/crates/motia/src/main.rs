fn main() {
    std::process::exit(motia::cli::main_with_args(std::env::args_os()));
}
