fn main() {
    let code = st_tree_cli::main_with_args(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
