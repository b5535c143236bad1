fn main() {
    std::process::exit(gridstate::cli::dispatch(std::env::args_os()));
}
