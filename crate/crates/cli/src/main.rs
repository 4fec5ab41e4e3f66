fn main() {
    std::process::exit(ctevidence_cli::dispatch(std::env::args_os()));
}
