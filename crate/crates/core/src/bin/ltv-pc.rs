fn main() {
    std::process::exit(ltv_pc::cli::main());
}
