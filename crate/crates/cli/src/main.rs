fn main() {
    std::process::exit(cns_cli::run(std::env::args_os()));
}
