fn main() {
    std::process::exit(robust_nic::cli::dispatch(std::env::args_os()));
}
