fn main() {
    std::process::exit(saetune_cli::run(std::env::args_os()));
}
