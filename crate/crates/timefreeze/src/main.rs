fn main() {
    std::process::exit(timefreeze::cli_main());
}
