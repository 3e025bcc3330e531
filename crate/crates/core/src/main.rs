fn main() {
    std::process::exit(fdtlab::cli_io::main_with(std::env::args_os()));
}
