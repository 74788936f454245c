fn main() {
    std::process::exit(asyncfl::cli::main());
}
