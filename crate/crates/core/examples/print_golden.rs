//! Prints the current golden-hash table (used to freeze the committed values).
fn main() {
    for (t, h) in promptseg::degrade::compute_golden_table().unwrap() {
        println!("    (\"{t}\", \"{h}\"),");
    }
}
