"""tridiff: a view-space 3D-aware autoencoder with a latent diffusion prior.

Self-contained pipeline: procedural single-view dataset, triplane feature
field rendered by alpha compositing, monocular-depth-supervised autoencoder
with adversarial novel-view training, and a second-stage latent diffusion
model with DDIM sampling and classifier-free guidance.
"""

__version__ = "0.1.0"
