//! Linux tun device backed by `/dev/net/tun`.

use std::ffi::CStr;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::net::Ipv4Addr;
use std::os::fd::{AsRawFd, RawFd};
use std::os::unix::fs::OpenOptionsExt;

use super::endpoint::VirtualInterface;
use super::{TunnelConfig, TunnelError};

const TUN_PATH: &str = "/dev/net/tun";

pub struct TunDevice {
    file: File,
    name: String,
}

fn ifreq_for(name: &str) -> libc::ifreq {
    // SAFETY: ifreq is plain old data; all-zero is a valid value.
    let mut req: libc::ifreq = unsafe { std::mem::zeroed() };
    for (dst, src) in req.ifr_name.iter_mut().zip(name.bytes()) {
        *dst = src as libc::c_char;
    }
    req
}

fn sockaddr_v4(addr: Ipv4Addr) -> libc::sockaddr {
    let sin = libc::sockaddr_in {
        sin_family: libc::AF_INET as libc::sa_family_t,
        sin_port: 0,
        sin_addr: libc::in_addr { s_addr: u32::from_ne_bytes(addr.octets()) },
        sin_zero: [0; 8],
    };
    // SAFETY: sockaddr_in and sockaddr have the same size on Linux.
    unsafe { std::mem::transmute::<libc::sockaddr_in, libc::sockaddr>(sin) }
}

/// Control socket used for SIOCSIF* ioctls.
struct CtlSocket(RawFd);

impl CtlSocket {
    fn open() -> io::Result<Self> {
        // SAFETY: plain socket(2) call.
        let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(Self(fd))
    }

    fn ioctl(&self, request: libc::Ioctl, req: &mut libc::ifreq) -> io::Result<()> {
        // SAFETY: req points to a valid ifreq for the SIOCSIF* family.
        if unsafe { libc::ioctl(self.0, request, req as *mut libc::ifreq) } < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }
}

impl Drop for CtlSocket {
    fn drop(&mut self) {
        // SAFETY: fd owned by this struct.
        unsafe { libc::close(self.0) };
    }
}

impl TunDevice {
    /// Creates the interface named in `config`, assigns its point-to-point
    /// addresses, sets the reduced MTU and brings it up.
    pub fn create(config: &TunnelConfig) -> Result<Self, TunnelError> {
        let name = config.virtual_if_name.clone();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .custom_flags(libc::O_NONBLOCK | libc::O_CLOEXEC)
            .open(TUN_PATH)
            .map_err(|e| match e.kind() {
                io::ErrorKind::PermissionDenied => TunnelError::Privilege { name: name.clone(), source: e },
                _ => TunnelError::Io(e),
            })?;

        let mut req = ifreq_for(&name);
        req.ifr_ifru.ifru_flags = (libc::IFF_TUN | libc::IFF_NO_PI | libc::IFF_TUN_EXCL) as libc::c_short;
        // SAFETY: TUNSETIFF takes a pointer to ifreq.
        if unsafe { libc::ioctl(file.as_raw_fd(), libc::TUNSETIFF, &mut req as *mut libc::ifreq) } < 0 {
            let e = io::Error::last_os_error();
            return Err(match e.raw_os_error() {
                Some(libc::EPERM) | Some(libc::EACCES) => TunnelError::Privilege { name, source: e },
                Some(libc::EBUSY) | Some(libc::EEXIST) => TunnelError::InterfaceCollision(name),
                _ => TunnelError::Io(e),
            });
        }
        // SAFETY: the kernel NUL-terminates ifr_name.
        let actual = unsafe { CStr::from_ptr(req.ifr_name.as_ptr()) }.to_string_lossy().into_owned();

        let ctl = CtlSocket::open()?;
        let privilege = |e: io::Error| match e.raw_os_error() {
            Some(libc::EPERM) | Some(libc::EACCES) => TunnelError::Privilege { name: actual.clone(), source: e },
            _ => TunnelError::Io(e),
        };

        let mut req = ifreq_for(&actual);
        req.ifr_ifru.ifru_mtu = config.virtual_mtu() as libc::c_int;
        ctl.ioctl(libc::SIOCSIFMTU, &mut req).map_err(privilege)?;

        let mut req = ifreq_for(&actual);
        req.ifr_ifru.ifru_addr = sockaddr_v4(config.virtual_addr);
        ctl.ioctl(libc::SIOCSIFADDR, &mut req).map_err(privilege)?;

        let mut req = ifreq_for(&actual);
        req.ifr_ifru.ifru_dstaddr = sockaddr_v4(config.virtual_peer);
        ctl.ioctl(libc::SIOCSIFDSTADDR, &mut req).map_err(privilege)?;

        let mut req = ifreq_for(&actual);
        ctl.ioctl(libc::SIOCGIFFLAGS, &mut req).map_err(privilege)?;
        // SAFETY: SIOCGIFFLAGS filled the flags member.
        let flags = unsafe { req.ifr_ifru.ifru_flags };
        req.ifr_ifru.ifru_flags = flags | (libc::IFF_UP | libc::IFF_RUNNING) as libc::c_short;
        ctl.ioctl(libc::SIOCSIFFLAGS, &mut req).map_err(privilege)?;

        Ok(Self { file, name: actual })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl AsRawFd for TunDevice {
    fn as_raw_fd(&self) -> RawFd {
        self.file.as_raw_fd()
    }
}

impl VirtualInterface for TunDevice {
    fn read_packet(&self, buf: &mut [u8]) -> io::Result<usize> {
        (&self.file).read(buf)
    }

    fn write_packet(&self, packet: &[u8]) -> io::Result<usize> {
        (&self.file).write(packet)
    }
}
