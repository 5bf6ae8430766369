fn main() {
    std::process::exit(uota::harness::run_command(std::env::args_os()));
}
