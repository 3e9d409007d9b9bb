fn main() {
    std::process::exit(kgcnn::cli::run(std::env::args_os()));
}
