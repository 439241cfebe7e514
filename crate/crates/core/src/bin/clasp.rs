fn main() {
    std::process::exit(clasp_core::cli::main_with(std::env::args_os()));
}
