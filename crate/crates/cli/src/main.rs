fn main() {
    std::process::exit(mimic_cli::run(std::env::args_os()));
}
