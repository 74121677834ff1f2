fn main() {
    std::process::exit(mtlaug::cli::main_with(std::env::args_os()));
}
