fn main() {
    std::process::exit(atcgad::cli::main());
}
