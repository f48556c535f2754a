fn main() {
    std::process::exit(relcal::cli::run(std::env::args_os()));
}
