fn main() {
    std::process::exit(stgmfm::cli::dispatch(std::env::args_os()));
}
