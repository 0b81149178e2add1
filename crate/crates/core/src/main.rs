fn main() {
    std::process::exit(unirep::cli::run(std::env::args_os()));
}
