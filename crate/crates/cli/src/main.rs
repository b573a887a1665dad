fn main() {
    std::process::exit(steerlab_cli::main_with(std::env::args_os()));
}
