fn main() {
    std::process::exit(ibpcat::cli::dispatch(std::env::args_os()));
}
