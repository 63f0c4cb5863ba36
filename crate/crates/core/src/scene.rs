//! The render-time world: primitive storage, truncation support and BVH.

use crate::appearance::AppearanceCoeffs;
use crate::camera::Ray;
use crate::geometry::{aabb_of, iso_factor, Aabb, GaussianShape};
use crate::spatial::{morton_order, unit_sphere_interval, Bvh, HitBuffer, TraversalStats};
use crate::{Error, Result, Vec3};

/// One Gaussian primitive. `id` is a stable identifier that survives storage
/// reordering; per-sample summation follows ascending `id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub id: u32,
    pub shape: GaussianShape,
    pub appearance: AppearanceCoeffs,
}

/// Cached truncation data for a primitive with a nonempty isosurface.
#[derive(Clone, Copy, Debug)]
struct Support {
    /// `1 / s̃` per local axis.
    inv_semi: Vec3,
    /// `2 ln(σ̃/σ_ε)`: converts normalised radius² to Mahalanobis².
    k_sq: f64,
    bounds: Aabb,
}

#[derive(Clone, Debug)]
pub struct Scene {
    primitives: Vec<Primitive>,
    sigma_eps: f64,
    support: Vec<Option<Support>>,
    /// BVH item slot -> storage index.
    bvh_items: Vec<u32>,
    bvh: Option<Bvh>,
    bounds: Aabb,
}

impl Scene {
    /// Builds derived data and the BVH. Primitives whose amplitude does not
    /// exceed `sigma_eps` are kept but have no support and never contribute.
    pub fn new(primitives: Vec<Primitive>, sigma_eps: f64) -> Result<Scene> {
        if !(sigma_eps > 0.0) || !sigma_eps.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma_eps {sigma_eps} must be > 0")));
        }
        let mut ids: Vec<u32> = primitives.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(format!("duplicate primitive id {}", w[0])));
        }
        let support: Vec<Option<Support>> = primitives
            .iter()
            .map(|p| {
                let k = iso_factor(p.shape.density(), sigma_eps).ok()?;
                Some(Support {
                    inv_semi: (p.shape.scales() * k).map(|v| 1.0 / v),
                    k_sq: k * k,
                    bounds: aabb_of(&p.shape, sigma_eps).ok()?,
                })
            })
            .collect();
        let bvh_items: Vec<u32> =
            support.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| i as u32).collect();
        let boxes: Vec<Aabb> = bvh_items.iter().map(|&i| support[i as usize].unwrap().bounds).collect();
        let bounds = boxes.iter().fold(Aabb::empty(), |acc, b| acc.union(b));
        let bvh = if boxes.is_empty() { None } else { Some(Bvh::build(&boxes)?) };
        Ok(Scene { primitives, sigma_eps, support, bvh_items, bvh, bounds })
    }

    pub fn empty(sigma_eps: f64) -> Result<Scene> {
        Scene::new(Vec::new(), sigma_eps)
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn into_primitives(self) -> Vec<Primitive> {
        self.primitives
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }

    pub fn bvh(&self) -> Option<&Bvh> {
        self.bvh.as_ref()
    }

    /// Union of all primitive boxes (empty box for an empty scene).
    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn primitive_bounds(&self, index: usize) -> Option<Aabb> {
        self.support[index].map(|s| s.bounds)
    }

    pub fn shapes(&self) -> Vec<GaussianShape> {
        self.primitives.iter().map(|p| p.shape.clone()).collect()
    }

    pub fn means(&self) -> Vec<Vec3> {
        self.primitives.iter().map(|p| p.shape.mean()).collect()
    }

    /// Sorts storage indices by primitive id.
    pub fn sort_by_id(&self, indices: &mut [u32]) {
        indices.sort_unstable_by_key(|&i| self.primitives[i as usize].id);
    }

    /// `σ̃·G(x)` if `x` lies inside the primitive's truncation ellipsoid.
    #[inline]
    pub fn truncated_density(&self, index: usize, x: &Vec3) -> Option<f64> {
        let sup = self.support[index].as_ref()?;
        let shape = &self.primitives[index].shape;
        let q = shape.to_local(x).component_mul(&sup.inv_semi).norm_squared();
        (q <= 1.0).then(|| shape.density() * (-0.5 * sup.k_sq * q).exp())
    }

    /// Parameter interval over which the ray lies inside the ellipsoid.
    pub fn ellipsoid_interval(&self, index: usize, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let sup = self.support[index].as_ref()?;
        let shape = &self.primitives[index].shape;
        let o = shape.to_local(origin).component_mul(&sup.inv_semi);
        let d = shape.rotation().tr_mul(dir).component_mul(&sup.inv_semi);
        unit_sphere_interval(&o, &d)
    }

    /// Smallest `t ∈ [lo, hi]` at which the ray is inside some ellipsoid.
    pub fn closest_hit(&self, origin: &Vec3, dir: &Vec3, lo: f64, hi: f64, stats: &mut TraversalStats) -> Option<f64> {
        let bvh = self.bvh.as_ref()?;
        if lo > hi {
            return None;
        }
        bvh.closest_hit(origin, dir, lo, hi, stats, |slot, lo, hi| {
            let idx = self.bvh_items[slot as usize] as usize;
            let (t0, t1) = self.ellipsoid_interval(idx, origin, dir)?;
            (t1 >= lo && t0 <= hi).then(|| t0.max(lo))
        })
    }

    /// Fills `buffer` with the storage index of every primitive whose box
    /// overlaps the ray over `[lo, hi]`, in ascending id order. Ellipsoid
    /// overlaps are tallied in `stats` to expose false positives.
    pub fn collect_segment(
        &self,
        origin: &Vec3,
        dir: &Vec3,
        lo: f64,
        hi: f64,
        buffer: &mut HitBuffer,
        stats: &mut TraversalStats,
    ) -> Result<usize> {
        buffer.clear();
        let Some(bvh) = self.bvh.as_ref() else {
            return Ok(0);
        };
        let mut ellipsoid_hits = 0;
        bvh.for_each_overlap(origin, dir, lo, hi, stats, |slot| {
            let idx = self.bvh_items[slot as usize];
            if let Some((t0, t1)) = self.ellipsoid_interval(idx as usize, origin, dir) {
                if t1 >= lo && t0 <= hi {
                    ellipsoid_hits += 1;
                }
            }
            buffer.push(idx)
        })?;
        stats.ellipsoid_hits += ellipsoid_hits;
        let slice = buffer.as_mut_slice();
        slice.sort_unstable_by_key(|&i| self.primitives[i as usize].id);
        Ok(buffer.len())
    }

    /// Convenience wrapper taking a [`Ray`].
    pub fn closest_hit_ray(&self, ray: &Ray, lo: f64, hi: f64, stats: &mut TraversalStats) -> Option<f64> {
        self.closest_hit(&ray.origin, &ray.dir, lo, hi, stats)
    }

    /// Applies `perm` (`perm[new] = old`) to primitive storage and rebuilds
    /// the BVH.
    pub fn permute(&mut self, perm: &[usize]) -> Result<()> {
        if perm.len() != self.primitives.len() {
            return Err(Error::InvalidParameter("permutation length mismatch".into()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidParameter("not a permutation".into()));
            }
        }
        let prims: Vec<Primitive> = perm.iter().map(|&i| self.primitives[i].clone()).collect();
        *self = Scene::new(prims, self.sigma_eps)?;
        Ok(())
    }

    /// Reorders storage by ascending Morton code of the primitive means,
    /// quantised over the bounding box of the means. Returns the applied
    /// permutation (`perm[new] = old`).
    pub fn reorder_by_morton(&mut self) -> Result<Vec<usize>> {
        if self.primitives.is_empty() {
            return Err(Error::EmptyScene);
        }
        let means = self.means();
        let bounds = means.iter().fold(Aabb::empty(), |mut acc, m| {
            acc.grow(m);
            acc
        });
        let perm = morton_order(&means, &bounds);
        self.permute(&perm)?;
        Ok(perm)
    }

    /// Copy of the scene with primitive `index` moved to `mean`.
    pub fn with_mean(&self, index: usize, mean: Vec3) -> Result<Scene> {
        let mut prims = self.primitives.clone();
        prims[index].shape = prims[index].shape.with_mean(mean);
        Scene::new(prims, self.sigma_eps)
    }

    /// Clips a ray's far bound to where it leaves the scene box. The near
    /// bound is left alone so the sample grid anchored at `t_near` is
    /// unchanged.
    pub fn clip_far(&self, ray: &Ray) -> Ray {
        let mut out = *ray;
        match self.bounds.ray_interval(&ray.origin, &ray.dir) {
            Some((_, t1)) if !self.bounds.is_empty() => out.t_far = out.t_far.min(t1),
            _ => out.t_far = out.t_near,
        }
        out
    }
}

/// Reorders a scene in place by Morton code.
pub fn reorder_by_morton(scene: &mut Scene) -> Result<Vec<usize>> {
    scene.reorder_by_morton()
}
