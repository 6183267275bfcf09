fn main() {
    std::process::exit(agentformer_core::cli::main_with_args(std::env::args_os()));
}
