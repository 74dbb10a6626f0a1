fn main() {
    std::process::exit(thermoeit::cli::main_with_args(std::env::args_os()));
}
