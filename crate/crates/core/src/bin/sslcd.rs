fn main() {
    std::process::exit(sslcd::cli::main_with(std::env::args_os()));
}
