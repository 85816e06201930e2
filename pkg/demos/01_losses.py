"""
The three contrastive objectives on a toy batch
================================================

Four patients, each seen through a CT embedding and an EHR embedding, both
already on the unit sphere. We score the batch with the supervised
contrastive loss, bidirectional InfoNCE and Barlow Twins, then take one
gradient step on the features to see which way each loss pushes them.
"""

# %%
import numpy as np

from pecon import barlow_twins_loss, infonce_loss, pecon_loss

rng = np.random.default_rng(0)
z_c = rng.standard_normal((4, 3))
z_c /= np.linalg.norm(z_c, axis=1, keepdims=True)
z_e = rng.standard_normal((4, 3))
z_e /= np.linalg.norm(z_e, axis=1, keepdims=True)
labels = np.array([1, 1, 0, 0])

# %%
# The supervised loss sees all 2B features at once. Every row is an anchor;
# its positives are the other rows with the same label, which includes the
# same patient's other modality and same-class patients in either modality.
z = np.vstack([z_c, z_e])
res = pecon_loss(z, np.concatenate([labels, labels]), tau=0.8)
print("pecon   ", round(res.value, 4))

# InfoNCE only knows about the cross-modal partner; labels play no part.
nce = infonce_loss(z_c, z_e, tau=0.8, direction_weight=0.5)
print("infonce ", round(nce.value, 4))

# Barlow Twins standardises each column and drives the cross-correlation
# matrix towards the identity.
bt = barlow_twins_loss(z_c, z_e, lambda_bt=0.005)
print("barlow  ", round(bt.value, 4))

# %%
# One small step along the negative gradient lowers each loss.
step = 0.05
print("pecon after step  ", round(pecon_loss(z - step * res.grad, np.concatenate([labels, labels])).value, 4))
g_c, g_e = nce.grad
print("infonce after step", round(infonce_loss(z_c - step * g_c, z_e - step * g_e).value, 4))

# %%
# Same-class cosine similarity before and after the step: the supervised loss
# pulls positive pairs together.
def mean_same_class_cos(rows, lab):
    sims = rows @ rows.T / np.outer(np.linalg.norm(rows, axis=1), np.linalg.norm(rows, axis=1))
    mask = (lab[:, None] == lab[None, :]) & ~np.eye(len(lab), dtype=bool)
    return sims[mask].mean()


lab2 = np.concatenate([labels, labels])
print("same-class cosine", round(mean_same_class_cos(z, lab2), 3), "->",
      round(mean_same_class_cos(z - step * res.grad, lab2), 3))
