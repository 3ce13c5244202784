fn main() {
    std::process::exit(straggler_sim::cli::run_cli(std::env::args_os()));
}
