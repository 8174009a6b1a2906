fn main() {
    std::process::exit(slp_harness::cli::main_with_args(std::env::args().collect()));
}
