fn main() {
    std::process::exit(wireimage::cli::run(std::env::args_os()));
}
