fn main() {
    std::process::exit(bmfpp::cli::main());
}
