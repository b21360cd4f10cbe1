fn main() {
    std::process::exit(balanced_mc::cli::cli_main(std::env::args_os()));
}
