fn main() {
    std::process::exit(ibt_cli::run(std::env::args_os()));
}
