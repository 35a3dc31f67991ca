fn main() {
    std::process::exit(ikrl::cli::run(std::env::args_os()));
}
