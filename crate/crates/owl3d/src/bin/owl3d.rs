use std::process::exit;

fn main() {
    exit(owl3d::cli::dispatch(std::env::args()));
}
