fn main() {
    std::process::exit(vesdn::cli::run(std::env::args_os()));
}
