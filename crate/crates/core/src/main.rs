fn main() {
    std::process::exit(mmldf::cli::run_from(std::env::args_os()));
}
