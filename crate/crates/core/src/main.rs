fn main() {
    std::process::exit(qsdt_core::cli::main_with(std::env::args_os()));
}
