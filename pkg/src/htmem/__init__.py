"""Zero-shot topological-memory planning from hallucinated samples.

Trains a conditional generative model and a contrastive connectivity score
on offline exploration data from many obstacle layouts, then plans in unseen
layouts by sampling candidate states, scoring a dense digraph, and following
the shortest path with an inverse-model controller.
"""

__version__ = "0.1.0"
