fn main() {
    std::process::exit(twostage::io::cli::cli_dispatch(std::env::args_os()));
}
