"""Job broker, weaver workers, data store and the two generation modes."""

from .broker import (BrokerError, BrokerServer, BrokerUnreachableError, InProcessBroker, JobEnvelope, TcpBroker,
                     connect_broker)
from .runs import (BatchReport, OnPolicyReport, TaskConfig, n_weave_jobs, run_offline_batch, run_onpolicy_loop,
                   segments, trajectory_poses)
from .store import DataStore, StoreConflictError, StoreKey
from .workers import (KillSwitch, RpcError, RpcTimeoutError, WorkerGroup, WorkerKilled, new_reply_queue, rpc_generate,
                      rpc_weaver, weaver_worker)

__all__ = [
    "BatchReport", "BrokerError", "BrokerServer", "BrokerUnreachableError", "DataStore", "InProcessBroker",
    "JobEnvelope", "KillSwitch", "OnPolicyReport", "RpcError", "RpcTimeoutError", "StoreConflictError", "StoreKey",
    "TaskConfig", "TcpBroker", "WorkerGroup", "WorkerKilled", "connect_broker", "n_weave_jobs", "new_reply_queue",
    "rpc_generate", "rpc_weaver", "run_offline_batch", "run_onpolicy_loop", "segments", "trajectory_poses",
    "weaver_worker",
]
