fn main() {
    std::process::exit(varsma::cli::run(std::env::args_os()));
}
