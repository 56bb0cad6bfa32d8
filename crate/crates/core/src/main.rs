fn main() {
    let code = std::panic::catch_unwind(|| lst_core::cli::main_with_args(std::env::args_os())).unwrap_or(1);
    std::process::exit(code);
}
