fn main() {
    std::process::exit(segflow_cli::run_cli(std::env::args_os()));
}
