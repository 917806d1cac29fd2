from typing import Annotated, Union
from pydantic import Field

from .AnomalyInjector import AnomalyInjector, InjectionOutcome
from .AnomalyInjectorCollective import AnomalyInjectorCollective
from .AnomalyInjectorContextual import AnomalyInjectorContextual
from .AnomalyInjectorInterCorr import AnomalyInjectorInterCorr
from .AnomalyInjectorIntraCorr import AnomalyInjectorIntraCorr
from .AnomalyInjectorPoint import AnomalyInjectorPoint

AnyInjector = Annotated[
    Union[
        AnomalyInjectorPoint,
        AnomalyInjectorCollective,
        AnomalyInjectorContextual,
        AnomalyInjectorIntraCorr,
        AnomalyInjectorInterCorr,
    ],
    Field(discriminator="kind"),
]
