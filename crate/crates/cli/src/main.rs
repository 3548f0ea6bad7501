fn main() {
    std::process::exit(cellsearch_cli::main_with(std::env::args_os()));
}
