fn main() {
    std::process::exit(kgqa_core::cli::run(std::env::args_os()));
}
