use proptest::prelude::*;
use urbanssl::augment::{
    adjust_brightness, batch_views, blur, color_jitter, gaussian_kernel, grayscale, hflip, random_resized_crop, vflip,
    AugmentationPipeline, ColorJitter, Recipe, ViewRecipe,
};
use urbanssl::raster::FloatImage;
use urbanssl::seed;

fn image(w: usize, h: usize, s: u64) -> FloatImage {
    use rand::Rng;
    let mut r = seed::substream(s, 0);
    FloatImage::new(w, h, (0..w * h * 3).map(|_| r.gen::<f32>()).collect()).unwrap()
}

fn in_unit_range(img: &FloatImage) -> bool {
    img.data().iter().all(|v| (0.0..=1.0).contains(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crops_have_the_requested_size(w in 8usize..48, h in 8usize..48, out in 1usize..40, s in any::<u64>(),
                                     lo in 0.05f64..0.9) {
        let img = image(w, h, s);
        let c = random_resized_crop(&img, (lo, 1.0), (3.0 / 4.0, 4.0 / 3.0), out, &mut seed::substream(s, 1)).unwrap();
        prop_assert_eq!((c.width(), c.height()), (out, out));
        prop_assert!(in_unit_range(&c));
    }

    #[test]
    fn pipelines_stay_in_range(s in any::<u64>(), recipe in 0usize..4) {
        let recipe = [Recipe::V1, Recipe::V2, Recipe::DinoGlobal, Recipe::DinoLocal][recipe];
        let p = AugmentationPipeline::for_recipe(recipe, 16);
        let out = p.apply(&image(24, 24, s), &mut seed::substream(s, 2)).unwrap();
        prop_assert_eq!((out.width(), out.height()), (16, 16));
        prop_assert!(in_unit_range(&out));
    }

    #[test]
    fn flips_are_involutions(w in 1usize..20, h in 1usize..20, s in any::<u64>()) {
        let img = image(w, h, s);
        prop_assert_eq!(hflip(&hflip(&img)), img.clone());
        prop_assert_eq!(vflip(&vflip(&img)), img);
    }

    #[test]
    fn zero_jitter_is_identity(s in any::<u64>()) {
        let img = image(10, 10, s);
        let j = ColorJitter::new(0.0, 0.0, 0.0, 0.0).unwrap();
        prop_assert_eq!(color_jitter(&img, &j, &mut seed::substream(s, 3)), img);
    }

    #[test]
    fn grayscale_equalizes_channels(s in any::<u64>()) {
        let g = grayscale(&image(9, 7, s));
        for p in g.data().chunks(3) {
            prop_assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn blur_keeps_constant_images(v in 0.0f32..1.0, sigma in 0.1f64..3.0) {
        let img = FloatImage::filled(12, 12, [v, v, v]);
        for x in blur(&img, sigma).data() {
            prop_assert!((x - v).abs() < 1e-5);
        }
    }

    #[test]
    fn kernels_are_normalized(sigma in 0.1f64..5.0) {
        let k = gaussian_kernel(sigma);
        prop_assert_eq!(k.len() % 2, 1);
        prop_assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn brightness_scales_linearly() {
    let img = FloatImage::filled(4, 4, [0.2, 0.4, 0.1]);
    let b = adjust_brightness(&img, 1.5);
    assert!(b.data().chunks(3).all(|p| (p[0] - 0.3).abs() < 1e-6 && (p[1] - 0.6).abs() < 1e-6));
}

#[test]
fn views_are_seeded_per_image() {
    let images: Vec<FloatImage> = (0..4).map(|i| image(32, 32, i)).collect();
    let recipe = ViewRecipe::pair(AugmentationPipeline::v2(16));
    let a = batch_views(&images, &recipe, 11).unwrap();
    let b = batch_views(&images, &recipe, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].global[0], a[0].global[1]);
    // Dropping an image does not change the views of the others.
    let c = batch_views(&images[..2], &recipe, 11).unwrap();
    assert_eq!(&a[..2], &c[..]);
    assert_ne!(batch_views(&images, &recipe, 12).unwrap(), a);
}

#[test]
fn multi_crop_shapes() {
    let recipe = ViewRecipe::multi_crop(32, 16, 4);
    let v = &batch_views(&[image(48, 48, 1)], &recipe, 0).unwrap()[0];
    assert_eq!(v.global.len(), 2);
    assert_eq!(v.local.len(), 4);
    assert!(v.global.iter().all(|g| g.width() == 32));
    assert!(v.local.iter().all(|l| l.width() == 16));
    assert!(ViewRecipe::multi_crop(16, 16, 2).validate().is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut r = seed::substream(0, 0);
    assert!(random_resized_crop(&image(6, 6, 0), (0.2, 1.0), (0.75, 1.33), 4, &mut r).is_err());
    assert!(random_resized_crop(&image(16, 16, 0), (0.0, 1.0), (0.75, 1.33), 4, &mut r).is_err());
    assert!(random_resized_crop(&image(16, 16, 0), (0.5, 0.2), (0.75, 1.33), 4, &mut r).is_err());
    assert!(ColorJitter::new(0.4, 0.4, 0.4, 0.6).is_err());
    assert!(ColorJitter::new(-0.1, 0.0, 0.0, 0.0).is_err());
}
