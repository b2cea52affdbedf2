fn main() { std::process::exit(tokenbudget::cli::main_with_args(std::env::args_os())); }
