fn main() {
    std::process::exit(nelf_cli::run(std::env::args_os()));
}
