// The reshape-transpose permutation that moves between frame-major and
// position-major token order.

use vmonarch::{permute_bn, Perm};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // 2 frames of 3 tokens each: [f0p0 f0p1 f0p2 f1p0 f1p1 f1p2]
    let tokens: Vec<usize> = (0..6).collect();
    let by_position = permute_bn(&tokens, 3)?;
    println!("frame-major    {tokens:?}");
    println!("position-major {by_position:?}");
    assert_eq!(by_position, vec![0, 3, 1, 4, 2, 5]);

    let p = Perm::new(3, 6)?;
    let back = p.inverse().apply(&by_position)?;
    assert_eq!(back, tokens);
    println!("inverse restores the original order");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
