fn main() {
    std::process::exit(t2l_cli::main_with(std::env::args_os()));
}
