"""compgen: a numerical laboratory for compositional data-generating processes.

The package builds observations as composition(slot canvases), where each
canvas depends on one slot of a factored latent. On top of that it provides:

* latent supports with samplers and a marginal-support equality check
  (:mod:`compgen.supports`);
* sprite and analytic component families plus sum / occlusion / alpha
  composition rules (:mod:`compgen.families`, :mod:`compgen.compose`);
* numerical Jacobians and the summed-rank support check
  (:mod:`compgen.jacobians`);
* reconstruction of component canvases from a black-box teacher by
  least-squares Jacobian recovery and path integration
  (:mod:`compgen.reconstruct`);
* a self-contained MLP trainer for compositional vs monolithic regression
  (:mod:`compgen.nets`);
* a config-driven experiment harness and CLI (:mod:`compgen.harness`,
  :mod:`compgen.cli`).
"""

from .compose import (
    CompositionKind,
    CompositionalModel,
    Dataset,
    compose,
    compose_jacobian,
    compose_vjp,
    evaluate,
    evaluate_batch,
    make_dataset,
)
from .families import (
    CanvasLayout,
    FeatureBasis,
    SmoothAnalytic,
    SpriteRenderer,
    random_smooth_family,
    render_batch,
    render_component,
)
from .jacobians import (
    JacobianEstimate,
    RankDeficiencyError,
    RankReport,
    SufficiencyReport,
    check_sufficient_support,
    jacobian_of_component,
    jacobian_of_composition,
    jacobian_of_f,
    summed_jacobian_rank,
)
from .nets import (
    CompositionalNet,
    Metrics,
    MonolithicNet,
    NetSpec,
    TrainConfig,
    TrainingDiverged,
    evaluate_metrics,
    init_params,
    load_net,
    match_param_count,
    param_count,
    save_net,
    train,
)
from .reconstruct import (
    GridField,
    PathPlan,
    ReconstructionReport,
    TeacherOracle,
    field_from_families,
    initial_canvases,
    integrate_component,
    plan_paths,
    solve_component_jacobian,
    verify_generalization,
)
from .supports import (
    AxisGap,
    CoverageGrid,
    DiagonalBand,
    FullBox,
    GappedOrthogonal,
    GaussianOrthogonal,
    LatentBox,
    OrthogonalAnchors,
    SampleSet,
    SupportSpec,
    check_compositional_support,
    marginal_coverage,
    sample_support,
    slice_points,
)

__version__ = "0.1.0"
