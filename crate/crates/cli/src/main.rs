fn main() {
    std::process::exit(kernelforge_cli::run(std::env::args_os()));
}
