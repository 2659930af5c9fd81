fn main() {
    std::process::exit(bid::cli::main_with(std::env::args()));
}
