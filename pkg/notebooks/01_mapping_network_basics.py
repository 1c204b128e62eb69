# %% [markdown]
# # Mapping network basics
#
# A mapping network is a two-layer MLP with a GELU hidden layer. It is
# trained to maximise cosine similarity between its output and a target
# embedding. Here we build a tiny one by hand, check its gradients against
# finite differences, and look at the learning-rate schedule used for training.

# %%
import numpy as np

from nerfbridge.optim import OneCycleSchedule, adamw_step, init_adamw, one_cycle_lr
from nerfbridge.tensor import MlpParams, cosine_loss_batch, gelu, mlp_backward, mlp_forward

rng = np.random.default_rng(0)

# %% [markdown]
# GELU is x times the standard normal CDF, so gelu(x) - gelu(-x) is exactly x.

# %%
xs = np.linspace(-3, 3, 7)
print(np.round(gelu(xs), 4))
print(np.round(gelu(xs) - gelu(-xs), 12))

# %% [markdown]
# A 6 -> 8 -> 4 network and a batch of 5 inputs with random targets.

# %%
dims = [6, 8, 4]
params = MlpParams(dims,
                   [rng.normal(size=(dims[k + 1], dims[k])) / np.sqrt(dims[k]) for k in range(2)],
                   [np.zeros(dims[k + 1]) for k in range(2)])
x = rng.normal(size=(5, 6))
y = rng.normal(size=(5, 4))

out, cache = mlp_forward(params, x)
losses, dloss = cosine_loss_batch(out, y)
grads = mlp_backward(params, cache, dloss)
print("per-sample loss", np.round(losses, 4))

# %% [markdown]
# Central differences on one weight agree with the analytic gradient.

# %%
h = 1e-5
w = params.weights[0]
old = w[2, 3]
w[2, 3] = old + h
up = cosine_loss_batch(mlp_forward(params, x)[0], y)[0].sum()
w[2, 3] = old - h
down = cosine_loss_batch(mlp_forward(params, x)[0], y)[0].sum()
w[2, 3] = old
print("analytic", grads.weights[0][2, 3], "numeric", (up - down) / (2 * h))

# %% [markdown]
# ## One-cycle schedule
#
# Warm up from max_lr/25 to max_lr over the first 30% of steps, then anneal
# to max_lr/1e4.

# %%
sched = OneCycleSchedule(max_lr=1e-3, total_steps=100)
lrs = [one_cycle_lr(sched, t) for t in range(100)]
print("start %.2e  peak %.2e at step %d  end %.2e" % (lrs[0], max(lrs), sched.peak_step, lrs[-1]))

# %% [markdown]
# A few AdamW steps on the toy problem drive the loss down.

# %%
state = init_adamw(params)
for t in range(100):
    out, cache = mlp_forward(params, x)
    losses, dloss = cosine_loss_batch(out, y)
    params, state = adamw_step(params, mlp_backward(params, cache, dloss / len(x)), state,
                               10 * lrs[t], 1e-2)
    if t % 25 == 0:
        print(t, round(float(losses.mean()), 4))
print("final", round(float(cosine_loss_batch(mlp_forward(params, x)[0], y)[0].mean()), 4))
