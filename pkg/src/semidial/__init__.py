"""Semi-supervised dialogue policy learning toolkit.

A synthetic multi-domain task-oriented dialogue environment, joint action
prediction / action embedding learning from partially annotated expert
demonstrations, a recurrent latent dynamics model that scores dialogue
progress as a per-turn reward, baseline rewards, and policy optimization,
wired together by the `semidial` command line tool.
"""

__version__ = "0.1.0"
