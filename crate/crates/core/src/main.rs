fn main() {
    std::process::exit(dexp::cli::run_args(std::env::args_os()));
}
