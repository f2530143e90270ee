fn main() {
    std::process::exit(ltmle::cli::cli_main(std::env::args_os()));
}
