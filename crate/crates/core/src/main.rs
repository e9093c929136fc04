fn main() {
    std::process::exit(promptseg::run_cli());
}
