fn main() {
    std::process::exit(amortenc::cli::run_command(std::env::args().skip(1)));
}
