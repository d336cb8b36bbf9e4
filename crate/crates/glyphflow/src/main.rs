fn main() {
    std::process::exit(glyphflow::cli::dispatch(std::env::args()));
}
