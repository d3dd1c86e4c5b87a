fn main() {
    std::process::exit(vqlab::cli::run(std::env::args_os()));
}
