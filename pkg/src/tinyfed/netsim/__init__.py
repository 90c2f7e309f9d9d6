"""Wire codec, transports and the device loop."""
from .codec import (Ack, Bye, DenseUp, ModelDown, ProtocolError, SparseUp, TaskAssign,
                    decode_frame, encode_frame)
from .device import ProtocolOrderError, RemoteLink, run_device_loop
from .transport import (ConnectError, ConnectionLostError, TcpListener, TransportClosedError,
                        TransportError, loopback_transport, tcp_connect)

__all__ = ["Ack", "Bye", "DenseUp", "ModelDown", "ProtocolError", "SparseUp", "TaskAssign",
           "decode_frame", "encode_frame", "ProtocolOrderError", "RemoteLink", "run_device_loop",
           "ConnectError", "ConnectionLostError", "TcpListener", "TransportClosedError",
           "TransportError", "loopback_transport", "tcp_connect"]
