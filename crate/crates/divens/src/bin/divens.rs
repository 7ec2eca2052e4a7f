//! Binary entry point; the argument grammar and all command logic live in
//! the library's `cli` module so they can be unit-tested.

fn main() {
    std::process::exit(divens::cli::run(std::env::args()));
}
