fn main() {
    std::process::exit(markov_tower::cli::main_with(std::env::args_os()));
}
