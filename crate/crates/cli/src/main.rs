fn main() {
    std::process::exit(mmfusion_cli::run_cli(std::env::args_os()));
}
