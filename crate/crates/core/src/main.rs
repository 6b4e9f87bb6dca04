use msgca::mem::TrackingAllocator;

#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

fn main() {
    std::process::exit(msgca::cli::run(std::env::args_os()));
}
