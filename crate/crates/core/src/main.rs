fn main() {
    std::process::exit(cdga::cli::cli_main(std::env::args_os()));
}
