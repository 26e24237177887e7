fn main() {
    std::process::exit(brainenc::bench::run_cli(std::env::args_os()));
}
