//! Loading a class-per-directory image tree from disk.

use std::path::Path;

use imae_core::data::{load_dataset, DataConfig, Split};
use imae_core::ErrorKind;

fn write_tree(root: &Path, split: &str, classes: usize, per_class: usize, size: u32) {
    for c in 0..classes {
        let dir = root.join(split).join(format!("class_{c:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = image::RgbImage::from_fn(size, size, |x, y| {
                image::Rgb([(c * 25) as u8, (x * 8) as u8, ((y + i as u32) * 8) as u8])
            });
            img.save(dir.join(format!("img_{i:03}.png"))).unwrap();
        }
    }
}

fn folder_config(root: &Path) -> DataConfig {
    DataConfig {
        name: "folder".into(),
        root: root.to_string_lossy().into_owned(),
        image_size: 32,
        ..DataConfig::default()
    }
}

#[test]
fn hundred_images_in_batches_of_32_drop_the_remainder() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), "train", 10, 10, 32);
    let data = load_dataset(&folder_config(dir.path()), Split::Train).unwrap();
    assert_eq!(data.len(), 100);
    assert_eq!(data.num_classes, 10);
    assert_eq!(data.batches_per_epoch(32, true), 3);
    let batches: Vec<_> = data.batches(32, 0, 0, true, true).collect();
    assert_eq!(batches.len(), 3);
    assert!(batches.iter().all(|b| b.len() == 32));
    assert_eq!(data.batches(32, 0, 0, true, false).count(), 4);
}

#[test]
fn pixels_are_scaled_to_unit_range_and_labels_follow_directory_order() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), "val", 3, 2, 32);
    let data = load_dataset(&folder_config(dir.path()), Split::Val).unwrap();
    assert_eq!(data.labels, vec![0, 0, 1, 1, 2, 2]);
    assert!(data.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!((data.images[[2, 0, 0, 0]] - 25.0 / 255.0).abs() < 1e-12);
}

#[test]
fn images_of_another_size_are_resized() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), "train", 2, 2, 48);
    let data = load_dataset(&folder_config(dir.path()), Split::Train).unwrap();
    assert_eq!(data.image_shape(), (32, 32, 3));
}

#[test]
fn a_missing_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), "train", 2, 2, 32);
    let err = load_dataset(&folder_config(dir.path()), Split::Val).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
}
