from .bandit import BanditDomain, BanditEnv, bandit_oracle_value, bandit_step, sample_bandit
from .darkroom import DarkRoomDomain, DarkRoomEnv, DarkRoomState, darkroom_reset, darkroom_step, sample_darkroom
from .raymaze import (
    RayHit,
    RayMazeDomain,
    RayMazeEnv,
    RayMazeParams,
    RayMazeState,
    raycast,
    raymaze_reset,
    raymaze_step,
    sample_maze,
)

DOMAINS = {
    "bandit": BanditDomain,
    "darkroom": DarkRoomDomain,
    "raymaze": RayMazeDomain,
}


def make_domain(name: str, **params):
    try:
        cls = DOMAINS[name]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; expected one of {sorted(DOMAINS)}") from None
    return cls(**params)
