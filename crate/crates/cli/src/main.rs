fn main() {
    std::process::exit(seqfn_cli::run(std::env::args_os()));
}
