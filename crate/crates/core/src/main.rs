fn main() {
    std::process::exit(txnfs::cli::run_cli(std::env::args_os()));
}
