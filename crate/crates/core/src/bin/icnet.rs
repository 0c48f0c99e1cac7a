fn main() {
    std::process::exit(icnet::cli::run_from(std::env::args_os()).into());
}
