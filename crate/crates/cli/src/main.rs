fn main() {
    std::process::exit(snaremap_cli::run(std::env::args_os()));
}
