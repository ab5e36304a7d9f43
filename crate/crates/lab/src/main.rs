fn main() {
    std::process::exit(setgan_lab::cli::main());
}
