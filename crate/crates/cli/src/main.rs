fn main() {
    std::process::exit(msa_cli::run(std::env::args_os()));
}
