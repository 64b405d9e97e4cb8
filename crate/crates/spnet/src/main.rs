fn main() {
    std::process::exit(spnet::cli::cli_dispatch(std::env::args().collect()));
}
