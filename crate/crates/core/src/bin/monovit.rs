fn main() {
    std::process::exit(monovit::cli::run(std::env::args_os()));
}
